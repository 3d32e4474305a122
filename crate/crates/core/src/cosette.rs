//! COSETTE item tokenizer: an MLP autoencoder around an `L`-level residual
//! quantizer, trained with quantization, reconstruction and a sigmoid
//! contrastive loss over co-occurring items, followed by collision
//! reallocation into a unique semantic-ID table.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use genrec_substrate::{lr_schedule, AdamW, Graph, Linear, ParamId, ParamStore, Scalar, Tensor, Var};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_cooccurrence, CooccurrenceBatch, EmbeddingMatrix, MAX_LEN};
use crate::error::{Error, Result};
use crate::kmeans::{self, residual_kmeans};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CosetteConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub dropout: f64,
    pub beta: f64,
    pub lambda: f64,
    pub init_t_prime: f64,
    pub init_bias: f64,
    /// When false, training is plain RQ-VAE: no co-occurrence batch at all.
    pub collaborative: bool,
    pub logit_bias: LogitBias,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Timelines sampled per co-occurrence batch.
    pub cooccurrence_timelines: usize,
    pub steps: usize,
    pub warmup_steps: usize,
}

impl Default for CosetteConfig {
    fn default() -> Self {
        Self {
            input_dim: 768,
            hidden: vec![512, 256],
            latent_dim: 128,
            levels: 4,
            codebook_size: 256,
            dropout: 0.1,
            beta: 0.25,
            lambda: 1e-3,
            init_t_prime: 2.0,
            init_bias: -8.0,
            collaborative: true,
            logit_bias: LogitBias::Subtract,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 256,
            cooccurrence_timelines: 16,
            steps: 100_000,
            warmup_steps: 1_000,
        }
    }
}

impl CosetteConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            bad.push("layer widths must be positive".to_string());
        }
        if self.levels == 0 || self.codebook_size < 2 {
            bad.push("need at least one level and two codewords".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.beta < 0.0 || self.lambda < 0.0 {
            bad.push("beta and lambda must be non-negative".into());
        }
        if self.batch_size < self.codebook_size {
            bad.push(format!("batch {} smaller than codebook size {}", self.batch_size, self.codebook_size));
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

/// How the learnable bias enters the pairwise logit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitBias {
    /// `P(co-occur) = sigmoid(t cos - b)`: `log(1 + exp(y (-t cos + b)))`.
    #[default]
    Subtract,
    /// `P(co-occur) = sigmoid(t cos + b)`, the sign used by reference
    /// sigmoid-loss code; with `b < 0` it starts out predicting "apart".
    Add,
}

/// Parameter layout of the tokenizer.
#[derive(Clone, Debug)]
pub struct Cosette {
    pub cfg: CosetteConfig,
    encoder: Vec<Linear>,
    decoder: Vec<Linear>,
    pub codebooks: Vec<ParamId>,
    pub t_prime: ParamId,
    pub bias: ParamId,
}

impl Cosette {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: CosetteConfig, rng: &mut impl Rng) -> Self {
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.latent_dim);
        let encoder = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("encoder.{i}"), w[0], w[1], rng))
            .collect();
        let rev: Vec<usize> = dims.iter().rev().copied().collect();
        let decoder = rev
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("decoder.{i}"), w[0], w[1], rng))
            .collect();
        let codebooks = (0..cfg.levels)
            .map(|l| {
                let init = genrec_substrate::nn::trunc_normal(&[cfg.codebook_size, cfg.latent_dim], 1.0, rng);
                store.add(&format!("codebook.{l}"), init, false)
            })
            .collect();
        let t_prime = store.add("t_prime", Tensor::scalar(T::of(cfg.init_t_prime)), false);
        let bias = store.add("bias", Tensor::scalar(T::of(cfg.init_bias)), false);
        Self { cfg, encoder, decoder, codebooks, t_prime, bias }
    }

    fn mlp<T: Scalar>(&self, layers: &[Linear], g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Var {
        for (i, layer) in layers.iter().enumerate() {
            x = layer.forward(g, store, x);
            if i + 1 < layers.len() {
                x = g.relu(x);
                x = g.dropout(x, self.cfg.dropout);
            }
        }
        x
    }

    /// `[n, input_dim] -> [n, latent_dim]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, e: Var) -> Var {
        assert_eq!(g.value(e).cols(), self.cfg.input_dim, "encode: input width");
        self.mlp(&self.encoder, g, store, e)
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Var {
        self.mlp(&self.decoder, g, store, z)
    }

    /// Loss terms on a content batch and an optional co-occurrence batch.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        content: &Tensor<T>,
        cooccurrence: Option<(&Tensor<T>, &CooccurrenceBatch)>,
    ) -> Result<CosetteLoss> {
        let e = g.constant(content.clone());
        let z = self.encode(g, store, e);
        let q = quantize_levels(g, store, &self.codebooks, z, self.cfg.beta);
        let z_st = g.straight_through(z, g.value(q.zhat).clone());
        let e_hat = self.decode(g, store, z_st);
        let l_r = reconstruction_loss(g, e, e_hat);
        let mut total = g.add(q.loss, l_r);
        let mut out = CosetteLoss {
            total,
            quantization: g.value(q.loss).item().as_f64(),
            reconstruction: g.value(l_r).item().as_f64(),
            cooccurrence_quantization: 0.0,
            collaborative: 0.0,
        };
        if let Some((x, batch)) = cooccurrence {
            let e = g.constant(x.clone());
            let z = self.encode(g, store, e);
            let qc = quantize_levels(g, store, &self.codebooks, z, self.cfg.beta);
            total = g.add(total, qc.loss);
            out.cooccurrence_quantization = g.value(qc.loss).item().as_f64();
            let zc = collaborative_latent(g, z, qc.zhat);
            let t = g.param(store, self.t_prime);
            let b = g.param(store, self.bias);
            let b = match self.cfg.logit_bias {
                LogitBias::Subtract => b,
                LogitBias::Add => g.scale(b, -T::one()),
            };
            match collaborative_loss(g, zc, batch, t, b) {
                Ok(l_c) => {
                    out.collaborative = g.value(l_c).item().as_f64();
                    let weighted = g.scale(l_c, T::of(self.cfg.lambda));
                    total = g.add(total, weighted);
                }
                Err(Error::DegenerateBatch(_)) => {}
                Err(e) => return Err(e),
            }
        }
        out.total = total;
        Ok(out)
    }
}

/// Handles and values of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CosetteLoss {
    pub total: Var,
    pub quantization: f64,
    pub reconstruction: f64,
    pub cooccurrence_quantization: f64,
    pub collaborative: f64,
}

/// Graph handles produced by [`quantize_levels`].
#[derive(Clone, Debug)]
pub struct QuantizedVars {
    pub codes: Vec<Vec<usize>>,
    /// Batch mean of the per-item quantization loss.
    pub loss: Var,
    /// Sum of selected codewords; gradient reaches the codebooks only.
    pub zhat: Var,
}

/// Residual quantization inside a graph, with the commitment loss
/// `mean_i sum_l ||sg(r_l) - c_l||^2 + beta ||r_l - sg(c_l)||^2`.
pub fn quantize_levels<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    codebooks: &[ParamId],
    z: Var,
    beta: f64,
) -> QuantizedVars {
    let n = g.value(z).rows();
    let dim = g.value(z).cols();
    let mut codes = vec![Vec::with_capacity(codebooks.len()); n];
    let mut r = z;
    let mut loss: Option<Var> = None;
    let mut zhat: Option<Var> = None;
    for &book in codebooks {
        let cb = g.param(store, book);
        let level_codes: Vec<usize> = {
            let (rv, cv) = (g.value(r), g.value(cb));
            (0..n).map(|i| nearest_code(rv.row(i), cv.data(), dim)).collect()
        };
        for (c, &k) in codes.iter_mut().zip(&level_codes) {
            c.push(k);
        }
        let c = g.gather_rows(cb, &level_codes);
        let r_sg = g.detach(r);
        let c_sg = g.detach(c);
        let d1 = g.sub(r_sg, c);
        let d1 = g.mul(d1, d1);
        let s1 = g.sum(d1);
        let d2 = g.sub(r, c_sg);
        let d2 = g.mul(d2, d2);
        let s2 = g.sum(d2);
        let s2 = g.scale(s2, T::of(beta));
        let term = g.add(s1, s2);
        loss = Some(loss.map_or(term, |l| g.add(l, term)));
        zhat = Some(zhat.map_or(c, |z| g.add(z, c)));
        r = g.sub(r, c_sg);
    }
    let loss = loss.expect("at least one level");
    let loss = g.scale(loss, T::one() / T::of(n as f64));
    QuantizedVars { codes, loss, zhat: zhat.expect("at least one level") }
}

/// `zhat + (z - sg(z))`: forward value is exactly `zhat`, gradient reaches
/// both the codebooks and the encoder.
pub fn collaborative_latent<T: Scalar>(g: &mut Graph<T>, z: Var, zhat: Var) -> Var {
    let z_sg = g.detach(z);
    let pass = g.sub(z, z_sg);
    g.add(zhat, pass)
}

/// Mean over rows of `||e - e_hat||^2`.
pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, e: Var, e_hat: Var) -> Var {
    let n = g.value(e).rows();
    let d = g.sub(e, e_hat);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    g.scale(s, T::one() / T::of(n as f64))
}

/// Sigmoid pairwise loss over a co-occurrence batch:
/// `1/B' sum_i 1/Y_i sum_{j != i} log(1 + exp(y_ij (-t cos_ij + b)))`
/// with `t = exp(t_prime)`. Items without positives are left out and `B'`
/// counts the items kept.
pub fn collaborative_loss<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    batch: &CooccurrenceBatch,
    t_prime: Var,
    bias: Var,
) -> Result<Var> {
    let n = batch.len();
    assert_eq!(g.value(z).rows(), n, "collaborative_loss: latent rows vs batch");
    let kept = batch.positives.iter().filter(|&&y| y > 0).count();
    if kept == 0 {
        return Err(Error::DegenerateBatch("no item in the batch has a positive partner".into()));
    }
    let mut weights = Tensor::zeros(&[n, n]);
    for i in 0..n {
        if batch.positives[i] == 0 {
            continue;
        }
        let w = T::one() / T::of((kept * batch.positives[i]) as f64);
        for j in 0..n {
            if j != i {
                weights.data_mut()[i * n + j] = w;
            }
        }
    }
    let labels = Tensor::new(&[n, n], batch.labels.iter().map(|&y| T::of(y as f64)).collect())?;
    let u = g.l2_normalize(z);
    let cos = g.matmul(u, u, true);
    let t = g.exp(t_prime);
    let logits = g.mul_scalar(cos, t);
    let logits = g.scale(logits, -T::one());
    let logits = g.add_scalar(logits, bias);
    let signed = g.mul_const(logits, labels);
    let losses = g.softplus(signed);
    Ok(g.weighted_sum(losses, weights))
}

/// Nearest codeword, ties to the lowest index.
pub fn nearest_code<T: Scalar>(r: &[T], book: &[T], dim: usize) -> usize {
    let mut best = (0, T::infinity());
    for (k, c) in book.chunks_exact(dim).enumerate() {
        let d = r.iter().zip(c).fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Codes, residuals and quantized latent of one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub codes: Vec<usize>,
    /// `r_1 = z` through `r_{L+1}`.
    pub residuals: Vec<Vec<f64>>,
    pub zhat: Vec<f64>,
}

impl QuantizationResult {
    pub fn final_residual(&self) -> &[f64] {
        self.residuals.last().expect("residuals hold at least z")
    }
}

/// Greedy residual quantization of `z` against row-major `K x dim`
/// codebooks.
pub fn residual_quantize(z: &[f64], codebooks: &[Vec<f64>]) -> QuantizationResult {
    let dim = z.len();
    let mut residuals = vec![z.to_vec()];
    let mut zhat = vec![0.0; dim];
    let mut codes = Vec::with_capacity(codebooks.len());
    for book in codebooks {
        let r = residuals.last().expect("non-empty");
        let k = nearest_code(r, book, dim);
        let c = &book[k * dim..(k + 1) * dim];
        let next: Vec<f64> = r.iter().zip(c).map(|(a, b)| a - b).collect();
        for (s, &b) in zhat.iter_mut().zip(c) {
            *s += b;
        }
        codes.push(k);
        residuals.push(next);
    }
    QuantizationResult { codes, residuals, zhat }
}

/// Fraction of distinct tuples among items.
pub fn unique_ratio(codes: &[Vec<usize>]) -> f64 {
    if codes.is_empty() {
        return 1.0;
    }
    let distinct: HashSet<&Vec<usize>> = codes.iter().collect();
    distinct.len() as f64 / codes.len() as f64
}

/// Injective map between items and code tuples.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticIdTable {
    codebook_size: usize,
    levels: usize,
    codes: Vec<Vec<usize>>,
    inverse: HashMap<Vec<usize>, usize>,
}

impl SemanticIdTable {
    pub fn new(codes: Vec<Vec<usize>>, codebook_size: usize, levels: usize) -> Result<Self> {
        let mut inverse = HashMap::with_capacity(codes.len());
        for (item, c) in codes.iter().enumerate() {
            if c.len() != levels || c.iter().any(|&v| v >= codebook_size) {
                return Err(Error::Data(format!("item {item} has invalid tuple {c:?}")));
            }
            if let Some(prev) = inverse.insert(c.clone(), item) {
                return Err(Error::Data(format!("items {prev} and {item} share tuple {c:?}")));
            }
        }
        Ok(Self { codebook_size, levels, codes, inverse })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codes(&self, item: usize) -> &[usize] {
        &self.codes[item]
    }

    pub fn all_codes(&self) -> &[Vec<usize>] {
        &self.codes
    }

    pub fn item_of(&self, tuple: &[usize]) -> Option<usize> {
        self.inverse.get(tuple).copied()
    }

    /// `item_id<TAB>v1<TAB>...<TAB>vL` per item.
    pub fn write_tsv<W: Write>(&self, item_ids: &[String], mut w: W) -> Result<()> {
        if item_ids.len() != self.codes.len() {
            return Err(Error::Alignment(format!("{} ids for {} items", item_ids.len(), self.codes.len())));
        }
        for (id, c) in item_ids.iter().zip(&self.codes) {
            let cols: Vec<String> = c.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{id}\t{}", cols.join("\t"))?;
        }
        Ok(())
    }

    /// Reads rows written by [`write_tsv`](Self::write_tsv); rows must follow catalog order.
    pub fn read_tsv<R: BufRead>(r: R, item_ids: &[String], codebook_size: usize) -> Result<Self> {
        let mut codes = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default();
            if item_ids.get(codes.len()).map(String::as_str) != Some(id) {
                return Err(Error::Alignment(format!("line {}: item {id:?} out of catalog order", i + 1)));
            }
            let tuple = fields
                .map(|f| f.parse::<usize>().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad code {f:?}") }))
                .collect::<Result<Vec<_>>>()?;
            codes.push(tuple);
        }
        if codes.len() != item_ids.len() {
            return Err(Error::Alignment(format!("{} tuples for {} items", codes.len(), item_ids.len())));
        }
        let levels = codes.first().map_or(0, Vec::len);
        Self::new(codes, codebook_size, levels)
    }
}

fn subtree_capacity(k: usize, depth: usize) -> usize {
    k.checked_pow(depth as u32).unwrap_or(usize::MAX)
}

/// Resolves tuple collisions. In every group sharing a tuple, the item with
/// the smallest final residual keeps it; each other item takes the unused
/// last-level code closest to its last residual, moving up a level when a
/// whole branch is full.
pub fn reallocate_collisions(
    results: &[QuantizationResult],
    codebooks: &[Vec<f64>],
    k: usize,
) -> Result<SemanticIdTable> {
    let levels = codebooks.len();
    let n = results.len();
    if n > subtree_capacity(k, levels) {
        return Err(Error::Capacity(format!("{n} items exceed {k}^{levels} code tuples")));
    }
    let dim = results.first().map_or(0, |r| r.residuals[0].len());
    let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for (i, r) in results.iter().enumerate() {
        groups.entry(&r.codes).or_default().push(i);
    }
    let mut used: HashSet<Vec<usize>> = HashSet::with_capacity(n);
    let mut prefix_used: HashMap<Vec<usize>, usize> = HashMap::new();
    let claim = |tuple: &[usize], used: &mut HashSet<Vec<usize>>, prefix_used: &mut HashMap<Vec<usize>, usize>| {
        used.insert(tuple.to_vec());
        for len in 1..levels {
            *prefix_used.entry(tuple[..len].to_vec()).or_default() += 1;
        }
    };
    let mut codes: Vec<Vec<usize>> = results.iter().map(|r| r.codes.clone()).collect();
    let mut losers = Vec::new();
    for (tuple, mut items) in groups {
        claim(tuple, &mut used, &mut prefix_used);
        if items.len() > 1 {
            let norm = |i: usize| results[i].final_residual().iter().map(|x| x * x).sum::<f64>();
            items.sort_by(|&a, &b| norm(a).total_cmp(&norm(b)).then(a.cmp(&b)));
            losers.extend_from_slice(&items[1..]);
        }
    }
    let full = |p: &[usize], used: &HashSet<Vec<usize>>, prefix_used: &HashMap<Vec<usize>, usize>| {
        if p.len() == levels {
            used.contains(p)
        } else {
            prefix_used.get(p).copied().unwrap_or(0) >= subtree_capacity(k, levels - p.len())
        }
    };
    let ranked = |r: &[f64], level: usize| {
        let book = &codebooks[level];
        let mut order: Vec<(f64, usize)> =
            (0..k).map(|c| (kmeans::sq_dist(r, &book[c * dim..(c + 1) * dim]), c)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.into_iter().map(|(_, c)| c)
    };
    for item in losers {
        let res = &results[item];
        let mut found = None;
        'levels: for m in (0..levels).rev() {
            let prefix = &res.codes[..m];
            if m > 0 && full(prefix, &used, &prefix_used) {
                continue;
            }
            for cand in ranked(&res.residuals[m], m) {
                let mut tuple = prefix.to_vec();
                tuple.push(cand);
                if full(&tuple, &used, &prefix_used) {
                    continue;
                }
                let mut r: Vec<f64> = res.residuals[m]
                    .iter()
                    .zip(&codebooks[m][cand * dim..(cand + 1) * dim])
                    .map(|(a, b)| a - b)
                    .collect();
                for lvl in m + 1..levels {
                    let pick = ranked(&r, lvl)
                        .find(|&c| {
                            tuple.push(c);
                            let ok = !full(&tuple, &used, &prefix_used);
                            tuple.pop();
                            ok
                        })
                        .expect("non-full branch has a free child");
                    tuple.push(pick);
                    for (x, y) in r.iter_mut().zip(&codebooks[lvl][pick * dim..(pick + 1) * dim]) {
                        *x -= y;
                    }
                }
                found = Some(tuple);
                break 'levels;
            }
        }
        let tuple = found.expect("capacity checked above");
        claim(&tuple, &mut used, &mut prefix_used);
        codes[item] = tuple;
    }
    SemanticIdTable::new(codes, k, levels)
}

/// PCA to at most 128 dimensions, then residual k-means. Returns the draft
/// codes (collisions possible).
pub fn pca_rk_baseline(
    embeddings: &EmbeddingMatrix,
    k: usize,
    levels: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let projected = pca_project(embeddings, 128)?;
    let dim = projected.len() / embeddings.rows();
    Ok(residual_kmeans(&projected, dim, k, levels, rng)?.1)
}

/// Centers the rows and projects them on the leading principal axes.
/// Row-major output with `min(max_dim, input dim)` columns.
pub fn pca_project(embeddings: &EmbeddingMatrix, max_dim: usize) -> Result<Vec<f64>> {
    let (n, d) = (embeddings.rows(), embeddings.dim());
    if n < 128 {
        return Err(Error::Config(format!("PCA baseline needs at least 128 items, got {n}")));
    }
    let x = DMatrix::from_fn(n, d, |i, j| embeddings.row(i)[j] as f64);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let out_dim = max_dim.min(d);
    let basis = DMatrix::from_fn(d, out_dim, |i, j| eig.eigenvectors[(i, order[j])]);
    let proj = centered * basis;
    Ok((0..n).flat_map(|i| (0..out_dim).map(move |j| (i, j))).map(|(i, j)| proj[(i, j)]).collect())
}

/// Trained tokenizer in training precision.
#[derive(Clone, Debug)]
pub struct Quantizer {
    pub model: Cosette,
    pub store: ParamStore<f32>,
}

/// Loss components recorded at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub quantization: f64,
    pub reconstruction: f64,
    pub cooccurrence_quantization: f64,
    pub collaborative: f64,
}

impl Quantizer {
    pub fn new(cfg: CosetteConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed, "cosette-init");
        let model = Cosette::new(&mut store, cfg, &mut rng);
        Ok(Self { model, store })
    }

    /// Latents of the given rows in eval mode, row-major.
    pub fn encode_rows(&self, embeddings: &EmbeddingMatrix, rows: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * self.model.cfg.latent_dim);
        for chunk in rows.chunks(1024) {
            let x = gather_embeddings(embeddings, chunk);
            let mut g = Graph::eval();
            let e = g.constant(x);
            let z = self.model.encode(&mut g, &self.store, e);
            out.extend(g.value(z).data().iter().map(|&v| v as f64));
        }
        out
    }

    pub fn codebooks(&self) -> Vec<Vec<f64>> {
        self.model.codebooks.iter().map(|&id| self.store.value(id).data().iter().map(|&v| v as f64).collect()).collect()
    }

    /// Sets every codebook from residual k-means over the given latents.
    pub fn init_codebooks(&mut self, latents: &[f64], rng: &mut impl Rng) -> Result<()> {
        let cfg = &self.model.cfg;
        let (books, _) = residual_kmeans(latents, cfg.latent_dim, cfg.codebook_size, cfg.levels, rng)?;
        for (&id, book) in self.model.codebooks.iter().zip(books) {
            for (dst, v) in self.store.value_mut(id).data_mut().iter_mut().zip(book) {
                *dst = v as f32;
            }
        }
        Ok(())
    }

    pub fn quantize_all(&self, embeddings: &EmbeddingMatrix) -> Vec<QuantizationResult> {
        let rows: Vec<usize> = (0..embeddings.rows()).collect();
        let latents = self.encode_rows(embeddings, &rows);
        let books = self.codebooks();
        latents.chunks_exact(self.model.cfg.latent_dim).map(|z| residual_quantize(z, &books)).collect()
    }

    /// Draft codes before collision handling.
    pub fn draft_codes(&self, embeddings: &EmbeddingMatrix) -> Vec<Vec<usize>> {
        self.quantize_all(embeddings).into_iter().map(|r| r.codes).collect()
    }

    pub fn tokenize(&self, embeddings: &EmbeddingMatrix) -> Result<SemanticIdTable> {
        let results = self.quantize_all(embeddings);
        reallocate_collisions(&results, &self.codebooks(), self.model.cfg.codebook_size)
    }
}

fn gather_embeddings<T: Scalar>(embeddings: &EmbeddingMatrix, rows: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows.len() * embeddings.dim());
    for &r in rows {
        data.extend(embeddings.row(r).iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(&[rows.len(), embeddings.dim()], data).expect("gather shape")
}

/// Trains a tokenizer. Content batches are uniform over items; co-occurrence
/// batches come from uniformly sampled training timelines (last `MAX_LEN`
/// items). Codebooks start from residual k-means on the first content batch.
pub fn train_cosette(
    cfg: &CosetteConfig,
    embeddings: &EmbeddingMatrix,
    train_sequences: &[Vec<usize>],
    seed: u64,
) -> Result<(Quantizer, Vec<StepLoss>)> {
    if embeddings.dim() != cfg.input_dim {
        return Err(Error::Alignment(format!("embedding dim {} vs encoder input {}", embeddings.dim(), cfg.input_dim)));
    }
    let n_items = embeddings.rows();
    if n_items < cfg.batch_size {
        return Err(Error::Init(format!("{n_items} items cannot fill a batch of {}", cfg.batch_size)));
    }
    let mut q = Quantizer::new(cfg.clone(), seed)?;
    let mut sampler = seed::rng(seed, "cosette-sampling");
    let dropout_seed = seed::substream(seed, "cosette-dropout");
    let first = sample(&mut sampler, n_items, cfg.batch_size).into_vec();
    let latents = q.encode_rows(embeddings, &first);
    q.init_codebooks(&latents, &mut seed::rng(seed, "cosette-kmeans"))?;

    let usable: Vec<usize> = (0..train_sequences.len()).filter(|&u| train_sequences[u].len() >= 2).collect();
    let opt = AdamW { weight_decay: cfg.weight_decay, ..AdamW::default() };
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let rows = sample(&mut sampler, n_items, cfg.batch_size).into_vec();
        let content = gather_embeddings::<f32>(embeddings, &rows);
        let cooc = if cfg.collaborative && !usable.is_empty() {
            let timelines: Vec<Vec<usize>> = (0..cfg.cooccurrence_timelines)
                .map(|_| {
                    let t = &train_sequences[usable[sampler.gen_range(0..usable.len())]];
                    t[t.len().saturating_sub(MAX_LEN)..].to_vec()
                })
                .collect();
            match batch_cooccurrence(&timelines) {
                Ok(b) => Some(b),
                Err(Error::DegenerateBatch(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let cooc_x = cooc.as_ref().map(|b| gather_embeddings::<f32>(embeddings, &b.items));
        let mut g = Graph::new(true, dropout_seed.wrapping_add(step as u64));
        let loss = q.model.loss(&mut g, &q.store, &content, cooc_x.as_ref().zip(cooc.as_ref()))?;
        let total = g.value(loss.total).item() as f64;
        if !total.is_finite() {
            return Err(Error::Data(format!("non-finite COSETTE loss at step {step}")));
        }
        let grads = g.backward(loss.total);
        let lr = lr_schedule(step as u64, cfg.steps as u64, cfg.warmup_steps as u64, cfg.lr)?;
        opt.step(&mut q.store, &grads, lr)?;
        log.push(StepLoss {
            step,
            total,
            quantization: loss.quantization,
            reconstruction: loss.reconstruction,
            cooccurrence_quantization: loss.cooccurrence_quantization,
            collaborative: loss.collaborative,
        });
    }
    Ok((q, log))
}
