use genrec_substrate::gradcheck::check_params;
use genrec_substrate::nn::trunc_normal;
use genrec_substrate::{AttentionSpec, Graph, ParamStore, SeqLayout, Tensor, TransformerConfig, TransformerStack};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    trunc_normal(shape, std, &mut rng(seed))
}

#[test]
fn elementwise_and_reduction_ops() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", random(&[3, 4], 1.0, 1), true);
    let b = store.add("b", random(&[3, 4], 1.0, 2), true);
    let bias = store.add("bias", random(&[4], 1.0, 3), true);
    let s = store.add("s", Tensor::scalar(0.7), true);
    let w = random(&[3, 4], 1.0, 4);
    let report = check_params(&mut store, H, 64, |g, st| {
        let (a, b, bias, s) = (g.param(st, a), g.param(st, b), g.param(st, bias), g.param(st, s));
        let x = g.mul(a, b);
        let x = g.sub(x, a);
        let x = g.add_bias(x, bias);
        let x = g.mul_scalar(x, s);
        let x = g.add_scalar(x, s);
        let e = g.exp(s);
        let x = g.mul_scalar(x, e);
        let y = g.softplus(x);
        let z = g.gelu(b);
        let y = g.add(y, z);
        let y = g.mul_const(y, w.clone());
        let y = g.scale(y, 0.3);
        let n = g.l2_normalize(y);
        let sq = g.mul(n, y);
        g.weighted_sum(sq, w.clone())
    });
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn matmul_layout_and_gather_ops() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", random(&[5, 3], 1.0, 5), true);
    let b = store.add("b", random(&[3, 4], 1.0, 6), true);
    let c = store.add("c", random(&[6, 4], 1.0, 7), true);
    let gamma = store.add("gamma", random(&[4], 1.0, 8), true);
    let beta = store.add("beta", random(&[4], 1.0, 9), true);
    let report = check_params(&mut store, H, 64, |g, st| {
        let (a, b, c) = (g.param(st, a), g.param(st, b), g.param(st, c));
        let (gm, bt) = (g.param(st, gamma), g.param(st, beta));
        let ab = g.matmul(a, b, false); // [5,4]
        let ln = g.layer_norm(ab, gm, bt);
        let act = g.gelu(ln);
        let act = g.add(act, ab);
        let cat = g.concat_rows(act, c); // [11,4]
        let picked = g.gather_rows(cat, &[0, 3, 3, 10, 7, 1]); // [6,4]
        let grouped = g.sum_row_groups(picked, 2); // [3,4]
        let seq = g.concat_seq(grouped, c, 3); // [9,4]
        let prod = g.matmul(seq, c, true); // [9,6]
        let scores = g.candidate_dot(grouped, c, 2); // [3,2]
        let r = g.reshape(scores, &[6]);
        let s1 = g.sum(r);
        let logits = g.scale(prod, 0.5);
        let ce = g
            .cross_entropy(
                logits,
                &[Some(1), None, Some(5), Some(0), Some(2), None, Some(4), Some(3), Some(3)],
                Some(&[(0, 3), (0, 6), (3, 6), (0, 6), (1, 4), (0, 6), (4, 6), (2, 5), (0, 6)]),
            )
            .unwrap();
        let s1 = g.scale(s1, 0.1);
        g.add(ce, s1)
    });
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn relu_and_dropout_with_fixed_mask() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", random(&[4, 8], 1.0, 11), true);
    let report = check_params(&mut store, H, 64, |g, st| {
        let a = g.param(st, a);
        let r = g.relu(a);
        let d = g.dropout(r, 0.3);
        let sq = g.mul(d, a);
        g.mean(sq)
    });
    assert!(report.max_rel_error < TOL, "{report:?}");
}

fn attention_case(causal: bool, q_len: usize, kv_len: usize, valid: Option<Vec<bool>>, dropout: f64) {
    let (batch, d) = (2, 8);
    let mut store = ParamStore::<f64>::new();
    let q = store.add("q", random(&[batch * q_len, d], 1.0, 21), true);
    let k = store.add("k", random(&[batch * kv_len, d], 1.0, 22), true);
    let v = store.add("v", random(&[batch * kv_len, d], 1.0, 23), true);
    let w = random(&[batch * q_len, d], 1.0, 24);
    let report = check_params(&mut store, H, 64, |g, st| {
        let (q, k, v) = (g.param(st, q), g.param(st, k), g.param(st, v));
        let spec = AttentionSpec { batch, q_len, kv_len, heads: 2, causal, kv_valid: valid.clone(), dropout };
        let o = g.attention(q, k, v, spec);
        g.weighted_sum(o, w.clone())
    });
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn attention_gradients() {
    attention_case(false, 3, 5, None, 0.0);
    attention_case(true, 4, 4, None, 0.0);
    attention_case(true, 2, 5, None, 0.0);
    let mut valid = vec![true; 10];
    valid[0] = false;
    valid[5] = false;
    valid[6] = false;
    attention_case(true, 5, 5, Some(valid), 0.0);
    attention_case(true, 4, 4, None, 0.25);
}

#[test]
fn transformer_stack_gradient() {
    let mut store = ParamStore::<f64>::new();
    let mut cfg = TransformerConfig::new(8, 2, 0.2, true, 6);
    cfg.head_dim = 4;
    let stack = TransformerStack::new(&mut store, "t", cfg, &mut rng(3)).unwrap();
    // larger weights than the 0.02 init so every path carries signal
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        let fresh = random(&shape, 0.4, 100 + i as u64);
        let cur = store.value_mut(id);
        for (c, f) in cur.data_mut().iter_mut().zip(fresh.data()) {
            *c += f;
        }
    }
    let x = random(&[2 * 5, 8], 1.0, 40);
    let w = random(&[2 * 5, 8], 1.0, 41);
    let mut valid = vec![true; 10];
    valid[0] = false;
    let layout = SeqLayout { batch: 2, len: 5, valid: Some(valid) };
    let report = check_params(&mut store, H, 24, |g, st| {
        let xv = g.constant(x.clone());
        let h = stack.forward(g, st, xv, &layout, None).unwrap();
        g.weighted_sum(h, w.clone())
    });
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn gradient_of_linear_form_is_input() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", random(&[4, 1], 1.0, 50), true);
    let x = random(&[1, 4], 1.0, 51);
    let mut g = Graph::eval();
    let wv = g.param(&store, w);
    let xv = g.constant(x.clone());
    let y = g.matmul(xv, wv, false);
    let y = g.sum(y);
    let grads = g.backward(y);
    assert_eq!(grads.param(w).unwrap().data(), x.data());
}
