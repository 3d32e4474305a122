//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the tape in reverse and returns a
//! [`Gradients`] table covering every node that depends on a parameter.
//!
//! Shape mismatches between operands are contract violations and panic;
//! they indicate a bug in the model code, not bad input data.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::optim::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a fused multi-head attention call.
///
/// Queries are `[batch * q_len, d]`, keys and values `[batch * kv_len, d]`.
/// With `causal`, query `i` sees keys `j <= i + (kv_len - q_len)`, which
/// lines the last query up with the last key when a cache holds a prefix.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// Per-key validity, `batch * kv_len` entries. Invalid keys are never attended.
    pub kv_valid: Option<Vec<bool>>,
    pub dropout: f64,
}

impl AttentionSpec {
    #[inline]
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j + self.q_len > i + self.kv_len {
            return false;
        }
        self.kv_valid.as_ref().is_none_or(|m| m[b * self.kv_len + j])
    }
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    spec: AttentionSpec,
    /// Softmax probabilities, `[batch, heads, q_len, kv_len]`.
    probs: Vec<T>,
    /// Dropout multipliers with the same layout, when dropout was applied.
    mask: Option<Vec<T>>,
}

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    MulConst(Var, Tensor<T>),
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Var, Var),
    ConcatSeq {
        a: Var,
        b: Var,
        batch: usize,
    },
    SumRowGroups {
        x: Var,
        group: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
    CandidateDot {
        h: Var,
        cands: Var,
        per_row: usize,
    },
    Attention(Box<AttentionSaved<T>>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        ranges: Option<Vec<(usize, usize)>>,
        probs: Tensor<T>,
        count: usize,
    },
    Reshape(Var),
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
    train: bool,
    rng: ChaCha8Rng,
    frozen: Frozen<T>,
}

/// Values of stop-gradient sites, recorded on one pass and replayed on
/// later passes so that finite differences see the surrogate the backward
/// pass differentiates.
#[derive(Clone, Debug)]
pub struct FrozenValues<T> {
    values: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
enum Frozen<T> {
    Off,
    Record(Vec<Tensor<T>>),
    Replay(Vec<Tensor<T>>, usize),
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    /// `seed` drives dropout masks only.
    pub fn new(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_of: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frozen: Frozen::Off,
        }
    }

    /// Records every stop-gradient value for [`take_frozen`](Self::take_frozen).
    pub fn recording(mut self) -> Self {
        self.frozen = Frozen::Record(Vec::new());
        self
    }

    /// Replays recorded stop-gradient values in creation order. Detached
    /// nodes take their recorded value; straight-through nodes take
    /// `target0 + (x - x0)`.
    pub fn replaying(mut self, values: FrozenValues<T>) -> Self {
        self.frozen = Frozen::Replay(values.values, 0);
        self
    }

    pub fn take_frozen(&mut self) -> FrozenValues<T> {
        match std::mem::replace(&mut self.frozen, Frozen::Off) {
            Frozen::Record(values) | Frozen::Replay(values, _) => FrozenValues { values },
            Frozen::Off => FrozenValues { values: Vec::new() },
        }
    }

    fn next_frozen(&mut self) -> Tensor<T> {
        match &mut self.frozen {
            Frozen::Replay(values, i) => {
                let v = values.get(*i).cloned().expect("replay ran past the recorded stop-gradient sites");
                *i += 1;
                v
            }
            _ => unreachable!("only called while replaying"),
        }
    }

    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param => true,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Stop-gradient: same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = match &mut self.frozen {
            Frozen::Off => self.value(x).clone(),
            Frozen::Record(log) => {
                log.push(self.nodes[x.0].value.clone());
                self.value(x).clone()
            }
            Frozen::Replay(..) => self.next_frozen(),
        };
        self.constant(value)
    }

    /// Bind a stored parameter. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        self.param_of.insert(v.0, id);
        v
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o - y;
        }
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * y;
        }
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = self.value(x).cols();
        assert_eq!(self.value(bias).len(), n, "add_bias: bias length");
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &y) in row.iter_mut().zip(&b) {
                *o = *o + y;
            }
        }
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar: scalar operand");
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::MulScalar(x, s), &[x, s])
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "add_scalar: scalar operand");
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x, s), &[x, s])
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Var {
        assert_eq!(self.value(x).shape(), c.shape(), "mul_const: shapes differ");
        let mut out = self.value(x).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(c.data()) {
            *o = *o * y;
        }
        self.push(out, Op::MulConst(x, c), &[x])
    }

    /// `a @ b`, or `a @ b^T` when `transpose_b`. Leading dims of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let out = self.value(a).matmul(self.value(b), transpose_b).unwrap_or_else(|e| panic!("matmul: {e}"));
        self.push(out, Op::MatMul { a, b, transpose_b }, &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let out = self.value(x).map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x), &[x])
    }

    /// `log(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x), &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        assert_eq!(self.value(gamma).len(), n, "layer_norm: gamma length");
        assert_eq!(self.value(beta).len(), n, "layer_norm: beta length");
        let rows = xv.len() / n.max(1);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xv.clone();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let nf = T::of(n as f64);
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let src = &xv.data()[r * n..(r + 1) * n];
            let mu = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            for (j, o) in row.iter_mut().enumerate() {
                *o = (src[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }, &[x, gamma, beta])
    }

    /// Inverted dropout. Identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout rate must be below 1");
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n).map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * m;
        }
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Selects rows of `x` (e.g. an embedding lookup). Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let rows = xv.rows();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < rows, "gather_rows: index {i} out of range for {rows} rows");
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[idx.len(), n], data).expect("gather shape");
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Stacks the rows of `a` above the rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let n = self.value(a).cols();
        assert_eq!(self.value(b).cols(), n, "concat_rows: column counts differ");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rows = self.value(a).rows() + self.value(b).rows();
        let out = Tensor::new(&[rows, n], data).expect("concat shape");
        self.push(out, Op::ConcatRows(a, b), &[a, b])
    }

    /// Per-sequence concatenation: `a` is `[batch * la, n]`, `b` is
    /// `[batch * lb, n]`; output sequence `s` is `a_s` followed by `b_s`.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize) -> Var {
        let n = self.value(a).cols();
        assert_eq!(self.value(b).cols(), n, "concat_seq: column counts differ");
        let (ra, rb) = (self.value(a).rows(), self.value(b).rows());
        assert!(batch > 0 && ra % batch == 0 && rb % batch == 0, "concat_seq: batch split");
        let (la, lb) = (ra / batch, rb / batch);
        let mut data = Vec::with_capacity((ra + rb) * n);
        for s in 0..batch {
            data.extend_from_slice(&self.value(a).data()[s * la * n..(s + 1) * la * n]);
            data.extend_from_slice(&self.value(b).data()[s * lb * n..(s + 1) * lb * n]);
        }
        let out = Tensor::new(&[ra + rb, n], data).expect("concat_seq shape");
        self.push(out, Op::ConcatSeq { a, b, batch }, &[a, b])
    }

    /// Sums consecutive groups of `group` rows: `[m * group, n] -> [m, n]`.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        assert!(group > 0 && xv.rows().is_multiple_of(group), "sum_row_groups: rows not divisible");
        let m = xv.rows() / group;
        let mut out = Tensor::zeros(&[m, n]);
        for r in 0..xv.rows() {
            let dst = out.row_mut(r / group);
            for (o, &v) in dst.iter_mut().zip(xv.row(r)) {
                *o = *o + v;
            }
        }
        self.push(out, Op::SumRowGroups { x, group }, &[x])
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(n) {
            let nrm = (row.iter().map(|&v| v * v).sum::<T>() + T::of(NORM_EPS)).sqrt();
            for v in row.iter_mut() {
                *v = *v / nrm;
            }
            norms.push(nrm);
        }
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `sum(w * x)` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Var {
        assert_eq!(self.value(x).shape(), weights.shape(), "weighted_sum: shapes differ");
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum::<T>();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x])
    }

    /// Row `i` of `h` dotted with candidate rows `i * per_row .. (i + 1) * per_row`
    /// of `cands`, giving `[m, per_row]`.
    pub fn candidate_dot(&mut self, h: Var, cands: Var, per_row: usize) -> Var {
        let (hv, cv) = (self.value(h), self.value(cands));
        let d = hv.cols();
        assert_eq!(cv.cols(), d, "candidate_dot: widths differ");
        let m = hv.rows();
        assert_eq!(cv.rows(), m * per_row, "candidate_dot: candidate count");
        let mut out = Tensor::zeros(&[m, per_row]);
        for i in 0..m {
            let hr = hv.row(i);
            for j in 0..per_row {
                out.data_mut()[i * per_row + j] = dot(hr, cv.row(i * per_row + j));
            }
        }
        self.push(out, Op::CandidateDot { h, cands, per_row }, &[h, cands])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Forward value `target`, backward identity into `x` (straight-through estimator).
    pub fn straight_through(&mut self, x: Var, target: Tensor<T>) -> Var {
        assert_eq!(self.value(x).shape(), target.shape(), "straight_through: shapes differ");
        let target = match &mut self.frozen {
            Frozen::Off => target,
            Frozen::Record(log) => {
                log.push(self.nodes[x.0].value.clone());
                log.push(target.clone());
                target
            }
            Frozen::Replay(..) => {
                let x0 = self.next_frozen();
                let t0 = self.next_frozen();
                let data =
                    t0.data().iter().zip(x0.data()).zip(self.value(x).data()).map(|((&t, &a), &b)| t + b - a).collect();
                Tensor::new(t0.shape(), data).expect("straight-through shape")
            }
        };
        self.push(target, Op::StraightThrough(x), &[x])
    }

    /// Fused scaled-dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let n_probs = spec.batch * spec.heads * spec.q_len * spec.kv_len;
        let keep = T::of(1.0 / (1.0 - spec.dropout));
        let mask: Option<Vec<T>> = (self.train && spec.dropout > 0.0).then(|| {
            (0..n_probs).map(|_| if self.rng.gen::<f64>() < spec.dropout { T::zero() } else { keep }).collect()
        });
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "attention: key width");
        assert_eq!(vv.cols(), d, "attention: value width");
        assert_eq!(qv.rows(), spec.batch * spec.q_len, "attention: query rows");
        assert_eq!(kv.rows(), spec.batch * spec.kv_len, "attention: key rows");
        assert_eq!(vv.rows(), spec.batch * spec.kv_len, "attention: value rows");
        assert!(spec.heads > 0 && d % spec.heads == 0, "attention: heads must divide width");
        if let Some(m) = &spec.kv_valid {
            assert_eq!(m.len(), spec.batch * spec.kv_len, "attention: mask length");
        }
        let hd = d / spec.heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let (lq, lk) = (spec.q_len, spec.kv_len);
        let mut probs = vec![T::zero(); n_probs];
        let mut out = Tensor::zeros(&[spec.batch * lq, d]);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let off = h * hd;
                for i in 0..lq {
                    let qrow = &qd[(b * lq + i) * d + off..(b * lq + i) * d + off + hd];
                    let base = ((b * spec.heads + h) * lq + i) * lk;
                    let p = &mut probs[base..base + lk];
                    let mut max = T::neg_infinity();
                    let mut any = false;
                    for j in 0..lk {
                        if spec.allowed(b, i, j) {
                            let krow = &kd[(b * lk + j) * d + off..(b * lk + j) * d + off + hd];
                            let s = dot(qrow, krow) * scale;
                            p[j] = s;
                            max = max.max(s);
                            any = true;
                        }
                    }
                    if !any {
                        continue;
                    }
                    let mut z = T::zero();
                    for j in 0..lk {
                        if spec.allowed(b, i, j) {
                            p[j] = (p[j] - max).exp();
                            z = z + p[j];
                        } else {
                            p[j] = T::zero();
                        }
                    }
                    for pj in p.iter_mut() {
                        *pj = *pj / z;
                    }
                    let orow = &mut out.data_mut()[(b * lq + i) * d + off..(b * lq + i) * d + off + hd];
                    for j in 0..lk {
                        let mut w = probs[base + j];
                        if let Some(mk) = mask.as_ref() {
                            w = w * mk[base + j];
                        }
                        if w == T::zero() {
                            continue;
                        }
                        let vrow = &vd[(b * lk + j) * d + off..(b * lk + j) * d + off + hd];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o = *o + w * x;
                        }
                    }
                }
            }
        }
        let saved = AttentionSaved { q, k, v, spec, probs, mask };
        self.push(out, Op::Attention(Box::new(saved)), &[q, k, v])
    }

    /// Mean softmax cross-entropy over rows that carry a target.
    ///
    /// When `ranges` is given, row `r` is normalized only over the columns
    /// `ranges[r].0 .. ranges[r].1`; every other column behaves as `-inf`.
    /// Returns `None` when no row has a target.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        ranges: Option<&[(usize, usize)]>,
    ) -> Option<Var> {
        let lv = self.value(logits);
        let n = lv.cols();
        assert_eq!(lv.rows(), targets.len(), "cross_entropy: target count");
        if let Some(r) = ranges {
            assert_eq!(r.len(), targets.len(), "cross_entropy: range count");
        }
        let mut probs = Tensor::zeros(&[lv.rows(), n]);
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let (lo, hi) = ranges.map_or((0, n), |rg| rg[r]);
            assert!(lo <= t && t < hi && hi <= n, "cross_entropy: target {t} outside [{lo},{hi})");
            let row = &lv.row(r)[lo..hi];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total = total + lse - lv.row(r)[t];
            let prow = probs.row_mut(r);
            for (j, &x) in row.iter().enumerate() {
                prow[lo + j] = (x - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return None;
        }
        let out = Tensor::scalar(total / T::of(count as f64));
        let op =
            Op::CrossEntropy { logits, targets: targets.to_vec(), ranges: ranges.map(<[_]>::to_vec), probs, count };
        Some(self.push(out, op, &[logits]))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward: root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (&node, &id) in &self.param_of {
            if let Some(g) = grads[node].take() {
                params.insert(id, g);
            }
        }
        Gradients { nodes: grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let n = g.cols();
                    let mut gb = Tensor::zeros(self.value(*bias).shape());
                    for row in g.data().chunks(n) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * c));
                }
                if self.wants(*s) {
                    let d = dot(g.data(), self.value(*x).data());
                    self.accumulate(grads, *s, Tensor::full(self.value(*s).shape(), d));
                }
            }
            Op::AddScalar(x, s) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*s) {
                    self.accumulate(grads, *s, Tensor::full(self.value(*s).shape(), g.sum()));
                }
            }
            Op::MulConst(x, c) => self.accumulate(grads, *x, zip_map(g, c, |a, b| a * b)),
            Op::MatMul { a, b, transpose_b } => self.matmul_backward(*a, *b, *transpose_b, g, grads),
            Op::Relu(x) => {
                let gx = zip_map(g, self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let (c, a) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let gx = zip_map(g, self.value(*x), |gv, v| {
                    let t = (c * (v + a * v * v * v)).tanh();
                    let dt = c * (T::one() + three * a * v * v);
                    gv * (half * (T::one() + t) + half * v * (T::one() - t * t) * dt)
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => self.accumulate(grads, *x, zip_map(g, out, |a, b| a * b)),
            Op::Softplus(x) => {
                let gx = zip_map(g, self.value(*x), |gv, v| gv * sigmoid(v));
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                self.layer_norm_backward(*x, *gamma, *beta, mean, rstd, g, grads)
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                for (o, &m) in gx.data_mut().iter_mut().zip(mask) {
                    *o = *o * m;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let n = g.cols();
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * n..(r + 1) * n];
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                let ga = Tensor::new(self.value(*a).shape(), g.data()[..split].to_vec()).expect("split");
                let gb = Tensor::new(self.value(*b).shape(), g.data()[split..].to_vec()).expect("split");
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::ConcatSeq { a, b, batch } => {
                let n = g.cols();
                let la = self.value(*a).rows() / batch;
                let lb = self.value(*b).rows() / batch;
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for s in 0..*batch {
                    let base = s * (la + lb) * n;
                    da.extend_from_slice(&g.data()[base..base + la * n]);
                    db.extend_from_slice(&g.data()[base + la * n..base + (la + lb) * n]);
                }
                self.accumulate(grads, *a, Tensor::new(self.value(*a).shape(), da).expect("split"));
                self.accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db).expect("split"));
            }
            Op::SumRowGroups { x, group } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for r in 0..gx.rows() {
                    gx.row_mut(r).copy_from_slice(g.row(r / group));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let n = g.cols();
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (r, &nrm) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let gy = &g.data()[r * n..(r + 1) * n];
                    let proj = dot(y, gy);
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = (gy[j] - y[j] * proj) / nrm;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, gx);
            }
            Op::WeightedSum { x, weights } => {
                let s = g.item();
                self.accumulate(grads, *x, weights.map(|w| w * s));
            }
            Op::CandidateDot { h, cands, per_row } => {
                let (hv, cv) = (self.value(*h), self.value(*cands));
                let d = hv.cols();
                let mut gh = Tensor::zeros(hv.shape());
                let mut gc = Tensor::zeros(cv.shape());
                for i in 0..hv.rows() {
                    for j in 0..*per_row {
                        let w = g.data()[i * per_row + j];
                        let c = i * per_row + j;
                        for t in 0..d {
                            gh.data_mut()[i * d + t] = gh.data()[i * d + t] + w * cv.data()[c * d + t];
                            gc.data_mut()[c * d + t] = gc.data()[c * d + t] + w * hv.data()[i * d + t];
                        }
                    }
                }
                self.accumulate(grads, *h, gh);
                self.accumulate(grads, *cands, gc);
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::CrossEntropy { logits, targets, ranges, probs, count } => {
                let scale = g.item() / T::of(*count as f64);
                let mut gl = Tensor::zeros(self.value(*logits).shape());
                let n = gl.cols();
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let (lo, hi) = ranges.as_ref().map_or((0, n), |rg| rg[r]);
                    let prow = probs.row(r);
                    let grow = gl.row_mut(r);
                    for j in lo..hi {
                        grow[j] = prow[j] * scale;
                    }
                    grow[t] = grow[t] - scale;
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.value(*x).shape()).expect("reshape back");
                self.accumulate(grads, *x, gx);
            }
            Op::StraightThrough(x) => self.accumulate(grads, *x, g.clone()),
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, transpose_b: bool, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let n = g.cols();
        if self.wants(a) {
            // dA = G @ B^T (or G @ B when B was transposed)
            let mut ga = Tensor::zeros(av.shape());
            let (rsb, csb) = if transpose_b { (k as isize, 1) } else { (1, n as isize) };
            T::gemm(
                m,
                n,
                k,
                T::one(),
                g.data(),
                n as isize,
                1,
                bv.data(),
                rsb,
                csb,
                T::zero(),
                ga.data_mut(),
                k as isize,
                1,
            );
            self.accumulate(grads, a, ga);
        }
        if self.wants(b) {
            let mut gb = Tensor::zeros(bv.shape());
            if transpose_b {
                // B is [n,k]: dB = G^T @ A
                T::gemm(
                    n,
                    m,
                    k,
                    T::one(),
                    g.data(),
                    1,
                    n as isize,
                    av.data(),
                    k as isize,
                    1,
                    T::zero(),
                    gb.data_mut(),
                    k as isize,
                    1,
                );
            } else {
                // dB = A^T @ G
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    av.data(),
                    1,
                    k as isize,
                    g.data(),
                    n as isize,
                    1,
                    T::zero(),
                    gb.data_mut(),
                    n as isize,
                    1,
                );
            }
            self.accumulate(grads, b, gb);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        rstd: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let n = xv.cols();
        let gm = self.value(gamma).data();
        let nf = T::of(n as f64);
        let mut gx = Tensor::zeros(xv.shape());
        let mut gg = Tensor::zeros(self.value(gamma).shape());
        let mut gb = Tensor::zeros(self.value(beta).shape());
        let mut xhat = vec![T::zero(); n];
        let mut dxhat = vec![T::zero(); n];
        for r in 0..mean.len() {
            let src = &xv.data()[r * n..(r + 1) * n];
            let gy = &g.data()[r * n..(r + 1) * n];
            for j in 0..n {
                xhat[j] = (src[j] - mean[r]) * rstd[r];
                dxhat[j] = gy[j] * gm[j];
                gg.data_mut()[j] = gg.data()[j] + gy[j] * xhat[j];
                gb.data_mut()[j] = gb.data()[j] + gy[j];
            }
            let m1 = dxhat.iter().copied().sum::<T>() / nf;
            let m2 = dot(&dxhat, &xhat) / nf;
            let dst = &mut gx.data_mut()[r * n..(r + 1) * n];
            for j in 0..n {
                dst[j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
        self.accumulate(grads, x, gx);
        self.accumulate(grads, gamma, gg);
        self.accumulate(grads, beta, gb);
    }

    fn attention_backward(&self, saved: &AttentionSaved<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let spec = &saved.spec;
        let (qv, kv, vv) = (self.value(saved.q), self.value(saved.k), self.value(saved.v));
        let d = qv.cols();
        let hd = d / spec.heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let (lq, lk) = (spec.q_len, spec.kv_len);
        let mut gq = Tensor::zeros(qv.shape());
        let mut gk = Tensor::zeros(kv.shape());
        let mut gv = Tensor::zeros(vv.shape());
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut dp = vec![T::zero(); lk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let off = h * hd;
                for i in 0..lq {
                    let base = ((b * spec.heads + h) * lq + i) * lk;
                    let p = &saved.probs[base..base + lk];
                    let gorow = &gd[(b * lq + i) * d + off..(b * lq + i) * d + off + hd];
                    let mut acc = T::zero();
                    for j in 0..lk {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let m = saved.mask.as_ref().map_or(T::one(), |mk| mk[base + j]);
                        let vrow = &vd[(b * lk + j) * d + off..(b * lk + j) * d + off + hd];
                        dp[j] = dot(gorow, vrow) * m;
                        acc = acc + p[j] * dp[j];
                        let w = p[j] * m;
                        if w != T::zero() {
                            let gvrow = &mut gv.data_mut()[(b * lk + j) * d + off..(b * lk + j) * d + off + hd];
                            for (o, &x) in gvrow.iter_mut().zip(gorow) {
                                *o = *o + w * x;
                            }
                        }
                    }
                    let qrow = &qd[(b * lq + i) * d + off..(b * lq + i) * d + off + hd];
                    for j in 0..lk {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - acc) * scale;
                        let krow = &kd[(b * lk + j) * d + off..(b * lk + j) * d + off + hd];
                        let gqrow = &mut gq.data_mut()[(b * lq + i) * d + off..(b * lq + i) * d + off + hd];
                        for (o, &x) in gqrow.iter_mut().zip(krow) {
                            *o = *o + ds * x;
                        }
                        let gkrow = &mut gk.data_mut()[(b * lk + j) * d + off..(b * lk + j) * d + off + hd];
                        for (o, &x) in gkrow.iter_mut().zip(qrow) {
                            *o = *o + ds * x;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, saved.q, gq);
        self.accumulate(grads, saved.k, gk);
        self.accumulate(grads, saved.v, gv);
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to an arbitrary node, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    /// Global Euclidean norm over all parameter gradients.
    pub fn param_norm(&self) -> T {
        self.params.values().map(|t| t.data().iter().map(|&x| x * x).sum::<T>()).sum::<T>().sqrt()
    }

    pub fn scale_params(&mut self, c: T) {
        for t in self.params.values_mut() {
            for x in t.data_mut() {
                *x = *x * c;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn dot_gradient_is_the_other_operand() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[3, 1], &[0.5, -1.0, 2.0]), true);
        let mut g = Graph::eval();
        let wv = g.param(&store, w);
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = g.matmul(x, wv, false);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        assert_eq!(grads.param(w).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0]), true);
        let mut g = Graph::eval();
        let wv = g.param(&store, w);
        let d = g.detach(wv);
        let sq = g.mul(d, d);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        assert!(grads.param(w).is_none());
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0]), true);
        let mut g = Graph::eval();
        let wv = g.param(&store, w);
        let st = g.straight_through(wv, t(&[2], &[10.0, 20.0]));
        assert_eq!(g.value(st).data(), &[10.0, 20.0]);
        let sq = g.mul(st, st);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        // d/dw of sum(st^2) with identity backward = 2 * st
        assert_eq!(grads.param(w).unwrap().data(), &[20.0, 40.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let mut g = Graph::<f64>::eval();
        let l = g.constant(Tensor::zeros(&[2, 6]));
        let ce = g.cross_entropy(l, &[Some(1), Some(4)], Some(&[(0, 3), (3, 6)])).unwrap();
        assert!((g.value(ce).item() - 3f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(l, &[None, None], None).is_none());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-9);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_query_outputs_zero() {
        let mut g = Graph::<f64>::eval();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let spec = AttentionSpec {
            batch: 1,
            q_len: 2,
            kv_len: 2,
            heads: 1,
            causal: true,
            kv_valid: Some(vec![false, true]),
            dropout: 0.0,
        };
        let y = g.attention(x, x, x, spec);
        assert_eq!(g.value(y).row(0), &[0.0, 0.0]);
        assert_eq!(g.value(y).row(1), &[3.0, 4.0]);
    }
}
